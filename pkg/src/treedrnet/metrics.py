import numpy as np


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return pred, target


def mse_mae(pred, target):
    pred, target = _pair(pred, target)
    err = pred - target
    return float(np.mean(err * err)), float(np.mean(np.abs(err)))


def _check_q(q):
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {q}")


def _pinball_terms(pred, target, q):
    diff = target - pred
    return q * np.maximum(diff, 0.0) + (1.0 - q) * np.maximum(-diff, 0.0)


def pinball_loss(pred, target, q):
    _check_q(q)
    pred, target = _pair(pred, target)
    return float(np.mean(_pinball_terms(pred, target, q)))


def q_risk(preds, targets, q):
    """Normalized quantile loss: ``2 * sum(pinball) / sum(|target|)``."""
    _check_q(q)
    preds, targets = _pair(preds, targets)
    denom = np.sum(np.abs(targets))
    if denom == 0.0:
        raise ValueError("q_risk is undefined when every target is zero")
    return float(2.0 * np.sum(_pinball_terms(preds, targets, q)) / denom)
