"""Exhaustive decoding oracle: enumerate every alignment path with prefix merging.

Walks the same path space as the frame-synchronous beam (blank advances the
frame, at most ``max_emit`` emissions per frame with a forced blank at the
cap) and log-adds path masses per blank-free prefix.  Exponential in size;
for tiny models only.
"""
from collections import defaultdict

import numpy as np

from rnnt_kit.data import BLANK_ID
from rnnt_kit.layers import START
from rnnt_kit.tensor import no_grad


def exhaustive_prefix_masses(model, feats, max_emit, temperature=1.0):
    """dict prefix -> total log mass over all alignments producing it."""
    with no_grad():
        enc = model.encode(feats).data
        T = enc.shape[0]
        K = model.config.vocab_size

        pred_cache = {}

        def pred_for(prefix):
            if prefix not in pred_cache:
                if prefix == ():
                    h, states = model.predict_step(START)
                else:
                    h_prev, states_prev = pred_for(prefix[:-1])
                    h, states = model.predict_step(prefix[-1], states_prev)
                pred_cache[prefix] = (h.data, states)
            return pred_cache[prefix]

        joint_cache = {}

        def log_probs(t, prefix):
            key = (t, prefix)
            if key not in joint_cache:
                joint_cache[key] = model.joint.step_log_probs(
                    enc[t], pred_for(prefix)[0], temperature)
            return joint_cache[key]

        masses = defaultdict(lambda: -np.inf)

        def walk(t, prefix, emitted, acc):
            lp = log_probs(t, prefix)
            blank_acc = acc + lp[BLANK_ID]
            if t == T - 1:
                masses[prefix] = np.logaddexp(masses[prefix], blank_acc)
            else:
                walk(t + 1, prefix, 0, blank_acc)
            if emitted < max_emit:
                for k in range(K):
                    if k != BLANK_ID:
                        walk(t, prefix + (k,), emitted + 1, acc + lp[k])

        walk(0, (), 0, 0.0)
    return dict(masses)


def best_sequence(masses):
    """Highest-mass prefix, ties broken lexicographically."""
    return min(masses.items(), key=lambda kv: (-kv[1], kv[0]))
