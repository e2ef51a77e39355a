import collections
import logging
import math
import os
import sys
import unittest
from unittest import mock

import numpy as np

import pyslim.backbones
import pyslim.dataset
import pyslim.embed
import pyslim.models
import pyslim.prompts
import pyslim.synthetic
from pyslim.embed import item_key, user_key
from pyslim.models import ModelConfig


def category_rationales(split):
    rationales = []
    for user, sequence in split.train.items():
        counts = collections.Counter(split.items[item].category for item in sequence)
        category = min(counts, key=lambda name: (-counts[name], name))
        rationales.append(pyslim.prompts.Rationale(user, 'prefers {} products'.format(category), category,
                                                   '{} product'.format(category), ''))
    return rationales


def make_store(split, dimension=16):
    provider = pyslim.embed.HashProvider(pyslim.embed.HashEncoderConfig(dimension=dimension))
    return pyslim.embed.embed_items_and_rationales(split.items, category_rationales(split), provider)


class Test(unittest.TestCase):

    OUTPUT_FOLDER = r'./outputs/models_tests'

    @classmethod
    def setUpClass(cls):
        super(Test, cls).setUpClass()
        os.makedirs(cls.OUTPUT_FOLDER, exist_ok=True)
        ds = pyslim.synthetic.planted_categories(n_users=30, n_categories=3, items_per_category=10,
                                                 min_length=6, max_length=8, seed=1)
        cls.split = pyslim.synthetic.split_of(ds)
        cls.store = make_store(cls.split)

    def setUp(self):
        logger = logging.getLogger()
        stdout_handler = logging.StreamHandler(sys.stdout)
        stdout_handler.setLevel(logging.DEBUG)
        logger.addHandler(stdout_handler)
        logger.setLevel(logging.DEBUG)
        logger.info('-' * 80)
        self._stdout_handler = stdout_handler

    def tearDown(self):
        logger = logging.getLogger()
        logger.removeHandler(self._stdout_handler)

    def small_config(self, **kwargs):
        fields = dict(mode='slim', backbone='mean', embed_dim=8, max_seq_len=5, lr=0.05, epochs=2,
                      batch_size=16, seed=3)
        fields.update(kwargs)
        return ModelConfig(**fields)

    def testConfig(self):
        logger = logging.getLogger()
        logger.info('testConfig')

        config = ModelConfig(mode='id-only', backbone='gru')
        self.assertEqual(config.mode, 'id')
        self.assertEqual(ModelConfig.from_dict(config.as_dict()), config)
        self.assertEqual(config.replace(lr=0.5).lr, 0.5)
        self.assertTrue(ModelConfig(mode='slim', backbone_input='id').feeds_id_rows)
        self.assertFalse(ModelConfig(mode='agnostic').uses_backbone)

        for fields in ({'mode': 'text-only'}, {'backbone': 'lstm'}, {'embed_dim': 0}, {'lr': -1.0},
                       {'optimizer': 'rmsprop'}, {'pairs': 'some'}):
            with self.assertRaises(ValueError):
                ModelConfig(**fields)

    def testGradientCheck(self):
        logger = logging.getLogger()
        logger.info('testGradientCheck')

        configs = [ModelConfig(mode=mode, backbone=backbone, embed_dim=4, max_seq_len=4, seed=1)
                   for mode in pyslim.models.MODES for backbone in pyslim.backbones.BACKBONES]
        configs += [ModelConfig(mode='slim', backbone=backbone, embed_dim=4, max_seq_len=4, seed=2,
                                backbone_input='id')
                    for backbone in pyslim.backbones.BACKBONES]
        for config in configs:
            worst = pyslim.models.grad_check(config)
            logger.info('%s/%s/%s: %g', config.mode, config.backbone, config.backbone_input, worst)
            self.assertLess(worst, 1e-4)

        with self.assertRaises(ValueError):
            pyslim.models.grad_check(ModelConfig(embed_dim=16))

    def testGradientCheckDetectsError(self):
        logger = logging.getLogger()
        logger.info('testGradientCheckDetectsError')

        pair_losses = pyslim.models.pair_losses

        def skewed(params, config, inputs, pairs, backward=True):
            losses, grads = pair_losses(params, config, inputs, pairs, backward)
            if backward:
                grads['item_id'][0, 0] += 1e-3
            return losses, grads

        config = ModelConfig(mode='id', embed_dim=4, max_seq_len=4, seed=1)
        self.assertLess(pyslim.models.grad_check(config), 1e-4)
        with mock.patch('pyslim.models.pair_losses', skewed):
            worst = pyslim.models.grad_check(config)
        logger.info('skewed gradient: %g', worst)
        self.assertGreater(worst, 1e-4)

    def testModeConsistency(self):
        logger = logging.getLogger()
        logger.info('testModeConsistency')

        d = 8
        config = self.small_config(backbone='gru', text_dim=16)
        params = pyslim.models.init_parameters(config, tuple(sorted(self.split.items)), np.random.default_rng(2))
        params['W_l'] = np.zeros((d, 16))
        params['b_l'] = np.zeros(d)
        params['W_f'] = np.hstack([np.zeros((d, d)), np.eye(d)])
        params['b_f'] = np.zeros(d)
        id_config = config.replace(mode='id', text_dim=None)
        id_params = pyslim.models.ParameterSet({name: array for name, array in params.items()
                                                if name not in ('W_l', 'b_l', 'W_f', 'b_f')}, params.item_index)

        slim = pyslim.models.SequentialRecommender(params, config, self.store)
        plain = pyslim.models.SequentialRecommender(id_params, id_config)
        candidates = sorted(self.split.items)
        for user in self.split.users[:5]:
            inputs, _ = self.split.test[user]
            np.testing.assert_allclose(slim.score(user, inputs, candidates), plain.score(user, inputs, candidates),
                                       atol=1e-12)

        small = self.small_config(embed_dim=2, text_dim=4)
        params = pyslim.models.init_parameters(small, ('a', 'b'), np.random.default_rng(0))
        params['W_l'] = np.zeros((2, 4))
        params['W_f'] = np.hstack([np.eye(2), np.eye(2)])
        vector = pyslim.models.item_encode(params, small, 'b', [0.3, -1.0, 2.0, 0.5])
        np.testing.assert_allclose(vector, params['item_id'][1], atol=1e-12)

    def testAgnosticIgnoresIds(self):
        logger = logging.getLogger()
        logger.info('testAgnosticIgnoresIds')

        config = self.small_config(mode='agnostic', optimizer='adam', lr=0.01, epochs=2)
        item_index = tuple(sorted(self.split.items))
        inputs = pyslim.models.ModelInputs.from_store(config, item_index, self.store, self.split.users)
        params = pyslim.models.init_parameters(config.replace(text_dim=16), item_index, np.random.default_rng(0))
        item_lookup = params.item_lookup
        pairs = pyslim.models.build_training_pairs(self.split, config, item_lookup, np.random.default_rng(0))
        _, grads = pyslim.models.pair_losses(params, config.replace(text_dim=16), inputs, pairs[:20])
        self.assertFalse(np.any(grads['item_id']))
        self.assertTrue(np.any(grads['W_t']))

        trained, _ = pyslim.models.train(self.split, self.store, config)
        initial = pyslim.models.init_parameters(config.replace(text_dim=16), item_index,
                                                np.random.default_rng(config.seed))
        self.assertTrue(np.array_equal(trained['item_id'], initial['item_id']))
        self.assertFalse(np.array_equal(trained['W_t'], initial['W_t']))

    def testRankingIgnoresScale(self):
        logger = logging.getLogger()
        logger.info('testRankingIgnoresScale')

        rng = np.random.default_rng(4)
        for _ in range(20):
            s = rng.normal(scale=0.1, size=6)
            z = rng.normal(scale=0.1, size=(15, 6))
            order = np.argsort(-(z @ s), kind='stable')
            for scale in (0.5, 2.0, 8.0):
                probabilities = np.array([pyslim.models.predict_score(scale * s, row) for row in z])
                self.assertTrue(np.array_equal(np.argsort(-probabilities, kind='stable'), order))

    def testDeterminism(self):
        logger = logging.getLogger()
        logger.info('testDeterminism')

        config = self.small_config(backbone='gru')
        params_a, trace_a = pyslim.models.train(self.split, self.store, config)
        params_b, trace_b = pyslim.models.train(self.split, self.store, config)
        self.assertTrue(params_a.equals(params_b))
        self.assertEqual(trace_a, trace_b)

        params_c, _ = pyslim.models.train(self.split, self.store, config.replace(seed=4))
        self.assertFalse(params_a.equals(params_c))

    def testZeroLearningRate(self):
        logger = logging.getLogger()
        logger.info('testZeroLearningRate')

        for optimizer in pyslim.models.OPTIMIZERS:
            config = self.small_config(lr=0.0, epochs=3, optimizer=optimizer, backbone='attention')
            params, trace = pyslim.models.train(self.split, self.store, config)
            initial = pyslim.models.init_parameters(config.replace(text_dim=16), tuple(sorted(self.split.items)),
                                                    np.random.default_rng(config.seed))
            self.assertTrue(params.equals(initial))
            self.assertEqual(len(trace), 3)
            self.assertEqual(trace[0], trace[1])
            self.assertEqual(trace[1], trace[2])

    def testTrainingReducesLoss(self):
        logger = logging.getLogger()
        logger.info('testTrainingReducesLoss')

        for mode in pyslim.models.MODES:
            config = self.small_config(mode=mode, epochs=5, optimizer='adam', lr=0.01)
            params, trace = pyslim.models.train(self.split, self.store, config)
            logger.info('%s: %r', mode, trace)
            self.assertTrue(params.is_finite())
            self.assertLess(trace[-1], trace[0])

    def testTextDimensionMismatch(self):
        logger = logging.getLogger()
        logger.info('testTextDimensionMismatch')

        with self.assertRaises(pyslim.embed.DimensionError):
            pyslim.models.train(self.split, self.store, self.small_config(text_dim=32))
        with self.assertRaises(pyslim.models.MissingEmbeddingError):
            pyslim.models.train(self.split, None, self.small_config(mode='id-text'))

    def testTrainingPairs(self):
        logger = logging.getLogger()
        logger.info('testTrainingPairs')

        item_lookup = {item: index for index, item in enumerate(sorted(self.split.items))}
        config = self.small_config(negatives=2)
        pairs = pyslim.models.build_training_pairs(self.split, config, item_lookup, np.random.default_rng(0))
        positives = [pair for pair in pairs if pair.label == 1.0]
        negatives = [pair for pair in pairs if pair.label == 0.0]
        expected = sum(len(sequence) - 1 for sequence in self.split.train.values() if len(sequence) >= 2)
        self.assertEqual(len(positives), expected)
        self.assertEqual(len(negatives), 2 * expected)
        for pair in negatives:
            history = {item_lookup[item] for item in self.split.train[pair.user]}
            self.assertNotIn(pair.target, history)
        for pair in pairs:
            self.assertLessEqual(len(pair.inputs), config.max_seq_len)

        last_only = pyslim.models.build_training_pairs(self.split, config.replace(pairs='last-only', negatives=0),
                                                       item_lookup, np.random.default_rng(0))
        self.assertEqual(len(last_only), len(self.split.train))

    def testEncodingConsistency(self):
        logger = logging.getLogger()
        logger.info('testEncodingConsistency')

        user = self.split.users[0]
        inputs, target = self.split.test[user]
        for mode in pyslim.models.MODES:
            config = self.small_config(mode=mode, backbone='gru', text_dim=16)
            params = pyslim.models.init_parameters(config, tuple(sorted(self.split.items)),
                                                   np.random.default_rng(5))
            model = pyslim.models.SequentialRecommender(params, config, self.store)

            reps = [pyslim.models.item_encode(params, config, item, self.store[item_key(item)]) for item in inputs]
            for item, rep in zip(inputs, reps):
                np.testing.assert_allclose(model.item_vector(item), rep, atol=1e-12)
            rationale = self.store[user_key(user)]
            state = pyslim.models.seq_encode(params, config, reps, rationale)
            np.testing.assert_allclose(model.user_vector(user, inputs), state, atol=1e-12)

            logits = model.score(user, inputs, [target])
            self.assertAlmostEqual(float(logits[0]), float(state @ model.item_vector(target)))
            probability = pyslim.models.predict_score(state, model.item_vector(target))
            self.assertAlmostEqual(probability, float(model.predict(user, inputs, [target])[0]))

    def testColdItems(self):
        logger = logging.getLogger()
        logger.info('testColdItems')

        config = self.small_config(text_dim=16)
        params = pyslim.models.init_parameters(config, ('a', 'b'), np.random.default_rng(0))
        text = np.ones(16) / 4.0
        vector = pyslim.models.item_encode(params, config, 'zzz', text)
        joined = np.concatenate([params['W_l'] @ text + params['b_l'], np.zeros(8)])
        np.testing.assert_allclose(vector, params['W_f'] @ joined + params['b_f'], atol=1e-12)

        id_config = self.small_config(mode='id')
        id_params = pyslim.models.init_parameters(id_config, ('a', 'b'), np.random.default_rng(0))
        with self.assertRaises(pyslim.models.OutOfVocabularyError):
            pyslim.models.item_encode(id_params, id_config, 'zzz')
        with self.assertRaises(pyslim.models.MissingEmbeddingError):
            pyslim.models.item_encode(params, config, 'a')

    def testSequenceEdgeCases(self):
        logger = logging.getLogger()
        logger.info('testSequenceEdgeCases')

        config = self.small_config(mode='id', max_seq_len=3)
        params = pyslim.models.init_parameters(config, ('a', 'b'), np.random.default_rng(0))
        with self.assertRaises(ValueError):
            pyslim.models.seq_encode(params, config, [])

        reps = np.arange(40, dtype=np.float64).reshape(5, 8)
        np.testing.assert_allclose(pyslim.models.seq_encode(params, config, reps), reps[-3:].mean(axis=0),
                                   atol=1e-12)

        slim = self.small_config(text_dim=16)
        slim_params = pyslim.models.init_parameters(slim, ('a', 'b'), np.random.default_rng(0))
        with self.assertRaises(pyslim.models.MissingEmbeddingError):
            pyslim.models.seq_encode(slim_params, slim, reps)

    def testDegenerateBackbones(self):
        logger = logging.getLogger()
        logger.info('testDegenerateBackbones')

        x = np.array([0.5, -1.0, 2.0])
        gru = self.small_config(mode='id', backbone='gru', embed_dim=3)
        params = pyslim.models.init_parameters(gru, ('a',), np.random.default_rng(0)).zeros_like()
        params['W_h'] = np.eye(3)
        output = pyslim.models.seq_encode(params, gru, [x])
        np.testing.assert_allclose(output, 0.5 * np.tanh(x), atol=1e-12)

        attention = self.small_config(mode='id', backbone='attention', embed_dim=3)
        params = pyslim.models.init_parameters(attention, ('a',), np.random.default_rng(0)).zeros_like()
        params['W_v'] = np.eye(3)
        params['W_o'] = np.eye(3)
        np.testing.assert_allclose(pyslim.models.seq_encode(params, attention, [x]), x, atol=1e-12)
        sequence = np.array([x, -x, 2 * x])
        np.testing.assert_allclose(pyslim.models.seq_encode(params, attention, sequence), sequence.mean(axis=0),
                                   atol=1e-12)

    def testScoresAndLosses(self):
        logger = logging.getLogger()
        logger.info('testScoresAndLosses')

        self.assertAlmostEqual(pyslim.models.predict_score([0.0, 0.0], [1.0, 2.0]), 0.5)
        self.assertGreater(pyslim.models.predict_score([1.0, 1.0], [3.0, 3.0]), 0.99)
        with self.assertRaises(pyslim.embed.DimensionError):
            pyslim.models.predict_score([1.0], [1.0, 2.0])

        self.assertEqual(pyslim.models.bce_loss(1.0, 1), 0.0)
        eps = float(np.finfo(np.float64).eps)
        self.assertAlmostEqual(pyslim.models.bce_loss(0.0, 1), -math.log(eps))
        self.assertAlmostEqual(pyslim.models.bce_loss(1.0, 0), -math.log(eps), places=4)
        self.assertTrue(math.isfinite(pyslim.models.bce_loss(1.0, 0)))
        self.assertAlmostEqual(pyslim.models.bce_loss(0.5, 0), math.log(2.0))
        for logit in (-3.0, 0.0, 2.5):
            for label in (0.0, 1.0):
                probability = 1.0 / (1.0 + math.exp(-logit))
                self.assertAlmostEqual(pyslim.models.bce_with_logit(logit, label),
                                       pyslim.models.bce_loss(probability, label))

    def testCheckpoint(self):
        logger = logging.getLogger()
        logger.info('testCheckpoint')

        config = self.small_config(backbone='attention', epochs=1)
        params, trace = pyslim.models.train(self.split, self.store, config)
        checkpoint = pyslim.models.Checkpoint(params, config.replace(text_dim=16), trace, 'abc123')
        path = os.path.join(self.OUTPUT_FOLDER, 'model.ckpt')
        size = pyslim.models.save_checkpoint(path, checkpoint)
        self.assertEqual(size, os.path.getsize(path))

        loaded = pyslim.models.load_checkpoint(path)
        self.assertTrue(loaded.params.equals(params))
        self.assertEqual(loaded.config, checkpoint.config)
        self.assertEqual(loaded.trace, trace)
        self.assertEqual(loaded.config_hash, 'abc123')

        user = self.split.users[0]
        inputs, target = self.split.test[user]
        candidates = [target] + sorted(self.split.items)[:5]
        self.assertTrue(np.array_equal(loaded.recommender(self.store).score(user, inputs, candidates),
                                       checkpoint.recommender(self.store).score(user, inputs, candidates)))

        data = checkpoint.to_bytes()
        with self.assertRaises(ValueError):
            pyslim.models.Checkpoint.from_bytes(b'X' + data[1:])


if __name__ == "__main__":
    unittest.main()
