"""Central finite differences against the hand-written backward passes."""

import numpy as np


def loss_and_grads(scorer, history, nodes, dloss):
    """Loss L(scores) and analytic dL/dparams; ``dloss(scores) -> (loss, dscores)``."""
    scores, cache = scorer.forward(history, nodes)
    loss, dscores = dloss(scores)
    return loss, scorer.backward(cache, dscores)


# cube root of machine epsilon balances truncation against roundoff for central differences
STEP = float(np.cbrt(np.finfo(float).eps))


def relative_error(scorer, history, nodes, dloss, rng, n_probe=40, step=STEP):
    """Max over parameter groups of ||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-10)
    on up to ``n_probe`` random entries per group (padding row excluded).

    Each entry is perturbed by ``step * max(1, |theta|)``.
    """
    _, grads = loss_and_grads(scorer, history, nodes, dloss)
    worst = 0.0
    for name, p in scorer.params.items():
        flat = p.reshape(-1)
        lo = p.shape[1] if name == "item_emb" else 0   # padding row is frozen
        idx = np.arange(lo, flat.size)
        if idx.size > n_probe:
            idx = rng.choice(idx, n_probe, replace=False)
        num = np.empty(idx.size)
        for k, i in enumerate(idx):
            old = flat[i]
            h = step * max(1.0, abs(old))
            flat[i] = old + h
            up = dloss(scorer.score(history, nodes))[0]
            flat[i] = old - h
            down = dloss(scorer.score(history, nodes))[0]
            flat[i] = old
            num[k] = (up - down) / (2 * h)
        ana = grads[name].reshape(-1)[idx]
        denom = max(np.linalg.norm(ana) + np.linalg.norm(num), 1e-10)
        worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    return worst


def scaled_din(scorer, scale=1.0, rng=None):
    """Blow DIN weights up so activations are O(1) and both PReLU branches are exercised."""
    rng = np.random.default_rng(rng)
    for k, v in scorer.params.items():
        if v.size > 1:
            v[...] = rng.normal(0, scale, v.shape)
    scorer.params["item_emb"][0] = 0.0
    return scorer
