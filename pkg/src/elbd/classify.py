"""Softmax MLP classifier used for gELBD and the feature-selection comparison."""
from __future__ import annotations

import numpy as np

from .mathcore import Rng
from .nn import Adam, DenseNet


def _softmax(a):
    a = a - a.max(axis=1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=1, keepdims=True)


class MlpClassifier:
    """Dense network on features scaled by ``1 / scale``, trained with
    cross-entropy and Adam."""

    def __init__(self, n_features, n_classes, rng: Rng, hidden=(64,), scale=255.0):
        sizes = [n_features, *hidden, n_classes]
        acts = ["relu"] * len(hidden) + ["identity"]
        self.net = DenseNet.init(sizes, acts, rng)
        self.n_classes = n_classes
        self.scale = scale

    def logits(self, x):
        return self.net(np.asarray(x, dtype=np.float64) / self.scale)

    def predict_proba(self, x):
        return _softmax(self.logits(x))

    def predict(self, x):
        return np.argmax(self.logits(x), axis=1)

    def accuracy(self, x, labels) -> float:
        return float(np.mean(self.predict(x) == np.asarray(labels)))

    def fit(self, x, labels, rng: Rng, epochs=30, lr=1e-3, batch=64):
        x = np.asarray(x, dtype=np.float64) / self.scale
        labels = np.asarray(labels, dtype=np.int64)
        n = x.shape[0]
        onehot = np.eye(self.n_classes)[labels]
        opt = Adam(lr=lr)
        params = self.net.parameters()
        losses = []
        for epoch in range(epochs):
            order = rng.split("perm", epoch).permutation(n)
            total = 0.0
            for start in range(0, n, batch):
                idx = order[start:start + batch]
                logits, tape = self.net.forward(x[idx])
                p = _softmax(logits)
                total += -np.sum(np.log(np.maximum(p[np.arange(len(idx)), labels[idx]], 1e-300)))
                grads, _ = self.net.backward(tape, (p - onehot[idx]) / len(idx))
                opt.step(params, DenseNet.named_grads(grads))
                self.net.touch()
            losses.append(total / n)
        return losses
