"""Hot inner loops, compiled with numba when available.

Set ``TRPOPPO_NUMBA=0`` before import to force the pure-numpy path.  Both
implementations are always importable from :data:`NUMBA_KERNELS` and
:data:`NUMPY_KERNELS` so they can be compared side by side.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None

USE_NUMBA = numba is not None and os.environ.get("TRPOPPO_NUMBA", "1").lower() not in ("0", "false", "no", "off")


def _gae_loop(rewards, values, dones, last_value, gamma, lam):
    n = rewards.shape[0]
    adv = np.zeros(n)
    running = 0.0
    next_value = last_value
    for t in range(n - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv


def _auprc_loop(scores, labels):
    # scores sorted descending; tied scores form one threshold
    n = scores.shape[0]
    total_pos = 0.0
    for i in range(n):
        total_pos += labels[i]
    area = 0.0
    tp = 0.0
    seen = 0.0
    prev_recall = 0.0
    i = 0
    while i < n:
        j = i
        while j < n and scores[j] == scores[i]:
            tp += labels[j]
            seen += 1.0
            j += 1
        recall = tp / total_pos
        area += (tp / seen) * (recall - prev_recall)
        prev_recall = recall
        i = j
    return area


def _adam_loop(params, grad, m, v, lr, beta1, beta2, eps, step):
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for i in range(params.shape[0]):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        params[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


def _adam_numpy(params, grad, m, v, lr, beta1, beta2, eps, step):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    params -= lr * m_hat / (np.sqrt(v_hat) + eps)


NUMPY_KERNELS = {
    "gae": _gae_loop,
    "auprc": _auprc_loop,
    "adam": _adam_numpy,
}

if numba is not None:
    NUMBA_KERNELS = {
        "gae": numba.njit(cache=True)(_gae_loop),
        "auprc": numba.njit(cache=True)(_auprc_loop),
        "adam": numba.njit(cache=True)(_adam_loop),
    }
else:  # pragma: no cover
    NUMBA_KERNELS = dict(NUMPY_KERNELS)

_ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS


def gae(rewards, values, dones, last_value, gamma, lam):
    """Backward GAE recursion; episode ends zero both bootstrap and carry."""
    return _ACTIVE["gae"](
        np.ascontiguousarray(rewards, dtype=np.float64),
        np.ascontiguousarray(values, dtype=np.float64),
        np.ascontiguousarray(dones, dtype=np.float64),
        float(last_value),
        float(gamma),
        float(lam),
    )


def auprc_sorted(scores, labels):
    return float(
        _ACTIVE["auprc"](
            np.ascontiguousarray(scores, dtype=np.float64),
            np.ascontiguousarray(labels, dtype=np.float64),
        )
    )


def adam_step(params, grad, m, v, lr, beta1, beta2, eps, step):
    """In-place bias-corrected Adam update of flat float64 arrays."""
    _ACTIVE["adam"](params, grad, m, v, float(lr), float(beta1), float(beta2), float(eps), int(step))
