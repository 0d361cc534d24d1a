"""Shared test utilities: finite-difference oracle and a tiny model factory."""

import numpy as np

from sta_seg.numerics import ParamView, Tape, backward, value_of
from sta_seg.segmenter import ModelConfig, StageConfig

FD_STEP = 1e-5
REL_FLOOR = 1e-8


def relative_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), REL_FLOOR)


def _scalar(x):
    return float(np.asarray(value_of(x)).reshape(-1)[0])


def gradcheck(store, loss_fn, n_samples=50, seed=0, names=None):
    """Compare backward() against central differences on sampled coordinates.

    ``loss_fn(view)`` must build a scalar loss from ``view[name]`` lookups.
    Returns the list of (name, index, analytic, numeric, rel_err).
    """
    tape = Tape()
    loss = loss_fn(ParamView(store, tape))
    store.zero_grads()
    backward(tape, loss, store)
    names = [n for n in (names or store.names()) if store.trainable(n)]
    sizes = np.array([store.value(n).size for n in names])
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_samples):
        k = rng.choice(len(names), p=sizes / sizes.sum())
        name = names[k]
        idx = np.unravel_index(rng.integers(sizes[k]), store.value(name).shape)
        analytic = store.grad(name)[idx]
        base = store.value(name)
        orig = base[idx]
        base[idx] = orig + FD_STEP
        up = _scalar(loss_fn(ParamView(store)))
        base[idx] = orig - FD_STEP
        down = _scalar(loss_fn(ParamView(store)))
        base[idx] = orig
        numeric = (up - down) / (2 * FD_STEP)
        out.append((name, idx, analytic, numeric, relative_error(analytic, numeric)))
    return out


def micro_config(T=2, H=16, W=16, classes=3, patch=4, dim=8, heads=2, blocks=1, lam=0.8,
                 decoder_dim=8):
    return ModelConfig(H=H, W=W, classes=classes, T=T, lam=lam, decoder_dim=decoder_dim,
                       stages=(StageConfig(patch, dim, blocks, heads, True),))


def randomize(model, seed=0, scale_=0.5):
    """Perturb every parameter so gradients are generic (no zero pos-encodings)."""
    rng = np.random.default_rng(seed)
    for name in model.params.names():
        v = model.params.value(name)
        model.params.set_value(name, v + scale_ * rng.standard_normal(v.shape))
    return model


def random_frames(n, H, W, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random((H, W, 3)) for _ in range(n)]


def random_labels(n, H, W, C, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, C, size=(H, W)).astype(np.uint8) for _ in range(n)]
