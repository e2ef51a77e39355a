"""Sequence encoders with hand-derived gradients.

Every backbone maps an ``(n, d)`` array of item representations to a single
``d`` vector and exposes the same three calls:

* ``init_params(rng, dimension, max_seq_len)`` -> ``{name: array}``
* ``forward(params, inputs)`` -> ``(output, cache)``
* ``backward(params, cache, d_output)`` -> ``({name: gradient}, d_inputs)``
"""

import collections

import numpy as np


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


def softmax(x):
    shifted = np.exp(x - np.max(x))
    return shifted / np.sum(shifted)


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class MeanBackbone(object):

    name = 'mean'
    param_names = ()

    def init_params(self, rng, dimension, max_seq_len):
        return collections.OrderedDict()

    def forward(self, params, inputs):
        return inputs.mean(axis=0), len(inputs)

    def backward(self, params, cache, d_output):
        count = cache
        d_inputs = np.tile(d_output / count, (count, 1))
        return {}, d_inputs


class GRUBackbone(object):
    """Single-layer gated recurrent encoder; the output is the last hidden state."""

    name = 'gru'
    param_names = ('W_z', 'U_z', 'b_z', 'W_r', 'U_r', 'b_r', 'W_h', 'U_h', 'b_h')

    def init_params(self, rng, dimension, max_seq_len):
        params = collections.OrderedDict()
        for gate in 'zrh':
            params['W_' + gate] = uniform_init(rng, (dimension, dimension), dimension)
            params['U_' + gate] = uniform_init(rng, (dimension, dimension), dimension)
            params['b_' + gate] = np.zeros(dimension)
        return params

    def forward(self, params, inputs):
        hidden = np.zeros(inputs.shape[1])
        steps = []
        for x in inputs:
            previous = hidden
            z = sigmoid(params['W_z'] @ x + params['U_z'] @ previous + params['b_z'])
            r = sigmoid(params['W_r'] @ x + params['U_r'] @ previous + params['b_r'])
            candidate = np.tanh(params['W_h'] @ x + params['U_h'] @ (r * previous) + params['b_h'])
            hidden = (1.0 - z) * previous + z * candidate
            steps.append((x, previous, z, r, candidate))
        return hidden, steps

    def backward(self, params, cache, d_output):
        grads = {name: np.zeros_like(params[name]) for name in self.param_names}
        d_inputs = np.zeros((len(cache), len(d_output)))
        d_hidden = d_output
        for t in reversed(range(len(cache))):
            x, previous, z, r, candidate = cache[t]

            d_z = d_hidden * (candidate - previous)
            d_candidate = d_hidden * z
            d_previous = d_hidden * (1.0 - z)

            d_a_h = d_candidate * (1.0 - candidate * candidate)
            grads['W_h'] += np.outer(d_a_h, x)
            grads['U_h'] += np.outer(d_a_h, r * previous)
            grads['b_h'] += d_a_h
            d_gated = params['U_h'].T @ d_a_h
            d_r = d_gated * previous
            d_previous += d_gated * r
            d_x = params['W_h'].T @ d_a_h

            d_a_z = d_z * z * (1.0 - z)
            grads['W_z'] += np.outer(d_a_z, x)
            grads['U_z'] += np.outer(d_a_z, previous)
            grads['b_z'] += d_a_z
            d_x += params['W_z'].T @ d_a_z
            d_previous += params['U_z'].T @ d_a_z

            d_a_r = d_r * r * (1.0 - r)
            grads['W_r'] += np.outer(d_a_r, x)
            grads['U_r'] += np.outer(d_a_r, previous)
            grads['b_r'] += d_a_r
            d_x += params['W_r'].T @ d_a_r
            d_previous += params['U_r'].T @ d_a_r

            d_inputs[t] = d_x
            d_hidden = d_previous
        return grads, d_inputs


class AttentionBackbone(object):
    """Single-block, single-head causal self-attention with learned positions.

    Only the final position is read out, so only its query is computed. There
    is no residual path and no normalisation. Positions are right-aligned: the
    most recent item always takes the last row of ``P``.
    """

    name = 'attention'
    param_names = ('W_q', 'W_k', 'W_v', 'W_o', 'P')

    def init_params(self, rng, dimension, max_seq_len):
        params = collections.OrderedDict()
        for name in ('W_q', 'W_k', 'W_v', 'W_o'):
            params[name] = uniform_init(rng, (dimension, dimension), dimension)
        params['P'] = uniform_init(rng, (max_seq_len, dimension), dimension)
        return params

    def forward(self, params, inputs):
        count, dimension = inputs.shape
        offset = len(params['P']) - count
        assert offset >= 0
        states = inputs + params['P'][offset:]
        query = params['W_q'] @ states[-1]
        keys = states @ params['W_k'].T
        values = states @ params['W_v'].T
        scale = 1.0 / np.sqrt(dimension)
        weights = softmax((keys @ query) * scale)
        context = weights @ values
        output = params['W_o'] @ context
        return output, (states, query, keys, values, weights, context, offset, scale)

    def backward(self, params, cache, d_output):
        states, query, keys, values, weights, context, offset, scale = cache
        grads = {name: np.zeros_like(params[name]) for name in self.param_names}

        grads['W_o'] += np.outer(d_output, context)
        d_context = params['W_o'].T @ d_output
        d_weights = values @ d_context
        d_values = np.outer(weights, d_context)
        d_logits = weights * (d_weights - weights @ d_weights)
        d_query = (keys.T @ d_logits) * scale
        d_keys = np.outer(d_logits, query) * scale

        d_states = d_keys @ params['W_k'] + d_values @ params['W_v']
        d_states[-1] += params['W_q'].T @ d_query
        grads['W_q'] += np.outer(d_query, states[-1])
        grads['W_k'] += d_keys.T @ states
        grads['W_v'] += d_values.T @ states
        grads['P'][offset:] += d_states
        return grads, d_states


BACKBONES = collections.OrderedDict((backbone.name, backbone) for backbone in (
    MeanBackbone(),
    GRUBackbone(),
    AttentionBackbone(),
))


def get_backbone(name):
    try:
        return BACKBONES[name]
    except KeyError:
        raise ValueError('unknown backbone: {!r}'.format(name))
