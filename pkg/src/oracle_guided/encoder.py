"""Feedforward trajectory autoencoder giving the 2-D latent mode command."""

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DegenerateInput, DimensionMismatch
from .lti import PX, PZ, THETA
from .nn import AdamState, adam_update, backward, forward, forward_cache, init_mlp

LATENT_DIM = 2


def window_features(states, dt=0.025):
    """Encoder input for reference windows of shape (..., H+1, n).

    Height relative to the window start, pitch, and finite-difference
    velocities of (p_x, p_z, theta); absolute position never enters.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim < 2 or states.shape[-1] < 3 or states.shape[-2] < 2:
        raise DimensionMismatch("windows must have shape (..., H+1 >= 2, n >= 3)")
    pos = states[..., [PX, PZ, THETA]]
    height = pos[..., 1] - pos[..., :1, 1]
    vel = np.diff(pos, axis=-2) / dt
    lead = states.shape[:-2]
    return np.concatenate(
        [height, pos[..., 2], vel.reshape(*lead, -1)], axis=-1
    )


class ModeEncoder(TransformerMixin, BaseEstimator):
    """Autoencoder window -> hidden -> z (2) -> hidden -> window.

    ``fit`` takes reference windows (n, H+1, state_dim); ``transform``
    returns latents (n, 2); ``inverse_transform`` decodes latents back to
    normalized feature space.
    """

    def __init__(self, hidden=32, epochs=200, lr=3e-3, batch_size=64, seed=0, dt=0.025):
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.dt = dt

    def _features(self, X):
        X = np.asarray(X, dtype=float)
        return window_features(X, self.dt) if X.ndim == 3 else X

    def fit(self, X, y=None):
        F = self._features(X)
        if len(F) < 1:
            raise DegenerateInput("need at least one window")
        self.n_features_in_ = F.shape[1]
        self.mean_ = F.mean(axis=0)
        std = F.std(axis=0)
        self.scale_ = np.where(std > 1e-8, std, 1.0)
        Z = (F - self.mean_) / self.scale_
        rng = np.random.default_rng(self.seed)
        d = self.n_features_in_
        self.enc_ = init_mlp((d, self.hidden, LATENT_DIM), rng)
        self.dec_ = init_mlp((LATENT_DIM, self.hidden, d), rng)
        n_enc = self.enc_.flat.size
        adam = AdamState.zeros(n_enc + self.dec_.flat.size, lr=self.lr)
        self.loss_curve_ = []
        for _ in range(self.epochs):
            perm = rng.permutation(len(Z))
            for lo in range(0, len(Z), self.batch_size):
                batch = Z[perm[lo : lo + self.batch_size]]
                _, grad = self._loss_grad(batch)
                flat, adam = adam_update(adam, np.concatenate([self.enc_.flat, self.dec_.flat]), grad)
                self.enc_ = self.enc_.with_flat(flat[:n_enc])
                self.dec_ = self.dec_.with_flat(flat[n_enc:])
            self.loss_curve_.append(self._loss_grad(Z)[0])
        return self

    def _loss_grad(self, batch):
        z, enc_cache = forward_cache(self.enc_, batch)
        recon, dec_cache = forward_cache(self.dec_, z)
        err = recon - batch
        loss = float(np.mean(err**2))
        g_out = 2.0 * err / err.size
        g_dec, g_z = backward(self.dec_, z, g_out, dec_cache)
        g_enc, _ = backward(self.enc_, batch, g_z, enc_cache)
        return loss, np.concatenate([g_enc, g_dec])

    def normalize(self, X):
        check_is_fitted(self, "enc_")
        F = self._features(X)
        if F.shape[-1] != self.n_features_in_:
            raise DimensionMismatch(
                f"window has {F.shape[-1]} features, encoder expects {self.n_features_in_}"
            )
        return (F - self.mean_) / self.scale_

    def transform(self, X):
        N = self.normalize(X)
        z = forward(self.enc_, N)
        assert z.shape[-1] == LATENT_DIM
        return z

    def inverse_transform(self, Z):
        check_is_fitted(self, "dec_")
        return forward(self.dec_, np.asarray(Z, dtype=float))

    def reconstruction_rmse(self, X):
        N = self.normalize(X)
        return float(np.sqrt(np.mean((self.inverse_transform(forward(self.enc_, N)) - N) ** 2)))

    def encode_states(self, windows):
        return self.transform(windows)

    # persistence through the checkpoint format
    def arrays(self):
        check_is_fitted(self, "enc_")
        return {
            "enc.flat": self.enc_.flat, "dec.flat": self.dec_.flat,
            "mean": self.mean_, "scale": self.scale_,
            "loss_curve": np.asarray(self.loss_curve_, dtype=float),
            "hyper": np.array([self.hidden, self.epochs, self.lr, self.batch_size, self.seed, self.dt]),
        }

    @classmethod
    def from_arrays(cls, arrays):
        hidden, epochs, lr, batch, seed, dt = arrays["hyper"]
        enc = cls(int(hidden), int(epochs), float(lr), int(batch), int(seed), float(dt))
        d = len(arrays["mean"])
        enc.n_features_in_ = d
        enc.mean_, enc.scale_ = arrays["mean"].copy(), arrays["scale"].copy()
        enc.enc_ = init_mlp((d, enc.hidden, LATENT_DIM), np.random.default_rng(0)).with_flat(arrays["enc.flat"])
        enc.dec_ = init_mlp((LATENT_DIM, enc.hidden, d), np.random.default_rng(0)).with_flat(arrays["dec.flat"])
        enc.loss_curve_ = list(arrays["loss_curve"])
        return enc


def cluster_separation(points, labels):
    """Mean pairwise centroid distance over mean intra-mode spread."""
    points = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    modes = sorted(set(labels.tolist()))
    if len(modes) < 2:
        raise DegenerateInput("need at least two modes")
    centroids, spreads = [], []
    for m in modes:
        sel = points[labels == m]
        if len(sel) < 2:
            raise DegenerateInput(f"mode {m!r} has fewer than 2 points")
        c = sel.mean(axis=0)
        centroids.append(c)
        spreads.append(math.sqrt(np.mean(np.sum((sel - c) ** 2, axis=1))))
    centroids = np.array(centroids)
    pair = [np.linalg.norm(centroids[i] - centroids[j])
            for i in range(len(modes)) for j in range(i + 1, len(modes))]
    inter = float(np.mean(pair))
    intra = float(np.mean(spreads))
    if inter == 0.0:
        return 0.0
    if intra < 1e-12:
        return math.inf
    return inter / intra
