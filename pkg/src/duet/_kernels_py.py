"""Pure-numpy versions of the pooling kernels."""

import numpy as np


def _check(ids: np.ndarray, offsets: np.ndarray, vocab: int) -> np.ndarray:
    lengths = np.diff(offsets)
    if np.any(lengths <= 0):
        raise ValueError("empty segment")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError("token id out of range")
    return lengths


def pool_forward(emb: np.ndarray, ids: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    lengths = _check(ids, offsets, emb.shape[0])
    if lengths.size == 0:
        return np.zeros((0, emb.shape[1]))
    # add position t of every segment at once so each segment sums its rows in
    # order, exactly like the compiled loop (reduceat uses a different order)
    sums = np.zeros((lengths.size, emb.shape[1]))
    starts = offsets[:-1]
    for t in range(int(lengths.max())):
        live = np.flatnonzero(lengths > t)
        sums[live] += emb[ids[starts[live] + t]]
    return sums / lengths[:, None].astype(np.float64)


def pool_backward(grad_pooled: np.ndarray, ids: np.ndarray, offsets: np.ndarray, grad_emb: np.ndarray) -> None:
    lengths = _check(ids, offsets, grad_emb.shape[0])
    if lengths.size == 0:
        return
    scaled = grad_pooled / lengths[:, None].astype(np.float64)
    np.add.at(grad_emb, ids, np.repeat(scaled, lengths, axis=0))
