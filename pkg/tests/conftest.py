import numpy as np
import pytest

from cnm.field import LossBatch, LossWeights, NetworkParams, init_siren, loss_and_param_grads


def reference_forward(weights, biases, omega0, x):
    """Straight-line numpy evaluation of the sine-layer recurrence."""
    h = np.asarray(x, dtype=np.float64)
    for W, b in zip(weights[:-1], biases[:-1]):
        h = np.sin(omega0 * (W @ h + b))
    return float((weights[-1] @ h + biases[-1])[0])


def fd_param_grads(params: NetworkParams, batch: LossBatch, h: float = 1e-5):
    """Central differences of the total loss, entry by entry."""
    out = []
    for tensor in params.tensors:
        flat = tensor.detach().view(-1)
        g = np.zeros(flat.numel())
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            lp = loss_and_param_grads(params, batch)[0]["total"]
            flat[i] = orig - h
            lm = loss_and_param_grads(params, batch)[0]["total"]
            flat[i] = orig
            g[i] = (lp - lm) / (2 * h)
        out.append(g.reshape(tuple(tensor.shape)))
    return out


def relative_errors(analytic, numeric):
    """Per-entry |a - n| / (|n| + floor), floor = 1e-6 * max|n| over the whole gradient.

    The floor keeps entries whose true derivative is essentially zero from
    dividing finite-difference round-off by ~0.
    """
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    floor = 1e-6 * np.abs(n).max()
    return np.abs(a - n) / (np.abs(n) + floor)


def mixed_batch(rng, n_surface=4, n_off=4, dim=3, labels=None, weights=None):
    pts = rng.uniform(-0.8, 0.8, (n_surface, dim))
    nrm = rng.normal(size=(n_surface, dim))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    off = rng.uniform(-1, 1, (n_off, dim))
    if labels is None:
        labels = rng.choice([-1, 0, 1], size=n_off)
    return LossBatch(pts, nrm, off, labels, surface_weights=weights,
                     weights=LossWeights(3000.0, 100.0, 50.0, 100.0), alpha=100.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net():
    return init_siren((3, 16, 16, 1), 30.0, seed=42)


def batched_total_loss(weights, biases, omega0, batch: LossBatch) -> np.ndarray:
    """Independent numpy evaluation of the weighted total loss for P parameter sets at once.

    ``weights[k]`` has shape (P, out, in) and ``biases[k]`` (P, out). The
    spatial gradient is carried forward as a per-layer Jacobian.
    """
    def field(x):
        n, d = x.shape
        h = np.broadcast_to(x, (weights[0].shape[0], n, d))
        J = None
        for W, b in zip(weights[:-1], biases[:-1]):
            a = omega0 * (h @ np.transpose(W, (0, 2, 1)) + b[:, None, :])
            dz = np.broadcast_to(np.transpose(W, (0, 2, 1))[:, :, None, :], (W.shape[0], d, n, W.shape[1])) \
                if J is None else J @ np.transpose(W, (0, 2, 1))[:, None]
            h = np.sin(a)
            J = omega0 * np.cos(a)[:, None] * dz
        w_last = weights[-1][:, 0, :]
        value = np.einsum("pni,pi->pn", h, w_last) + biases[-1][:, 0][:, None]
        grad = np.einsum("pkni,pi->pnk", J, w_last)
        return value, grad

    lw = batch.weights
    f, g = field(batch.surface_points)
    w = np.ones(len(batch.surface_points)) if batch.surface_weights is None else np.asarray(batch.surface_weights)
    data = (w * np.abs(f)).mean(axis=1)
    normal = (w * np.abs(g - batch.surface_normals).sum(axis=2)).mean(axis=1)
    eik_s = w * np.abs(np.linalg.norm(g, axis=2) - 1.0)
    fo, go = field(batch.off_points)
    eik_o = np.abs(np.linalg.norm(go, axis=2) - 1.0)
    eikonal = np.concatenate([eik_s, eik_o], axis=1).mean(axis=1)
    lab = batch.off_labels.astype(np.float64)
    arg = np.where(lab == 0, -batch.alpha * np.abs(fo), -batch.alpha * lab * fo)
    off = np.exp(np.clip(arg, -40.0, 40.0)).mean(axis=1)
    return lw.data * data + lw.normal * normal + lw.eikonal * eikonal + lw.off * off


def fd_param_grads_batched(params: NetworkParams, batch: LossBatch, h: float = 1e-5, chunk: int = 512):
    """Fourth-order central differences of the total loss for every parameter entry.

    Many entries are perturbed per numpy call. The five-point stencil keeps
    the truncation error (which grows like omega0^5 h^4) well below 1e-4.
    """
    ws = [w.detach().numpy() for w in params.weights]
    bs = [b.detach().numpy() for b in params.biases]
    arrays = ws + bs
    sizes = [a.size for a in arrays]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    flat = np.concatenate([a.ravel() for a in arrays])
    grad = np.zeros(flat.size)
    L = len(ws)

    def evaluate(idx, step):
        P = len(idx)
        stacked = [np.repeat(a[None], P, axis=0) for a in arrays]
        for row, i in enumerate(idx):
            k = np.searchsorted(offsets, i, side="right") - 1
            stacked[k][row].flat[i - offsets[k]] += step
        return batched_total_loss(stacked[:L], stacked[L:], params.omega0, batch)

    for s in range(0, flat.size, chunk):
        idx = np.arange(s, min(s + chunk, flat.size))
        grad[idx] = (8 * (evaluate(idx, h) - evaluate(idx, -h)) - (evaluate(idx, 2 * h) - evaluate(idx, -2 * h))) / (12 * h)
    return [grad[offsets[k]:offsets[k + 1]].reshape(arrays[k].shape) for k in range(len(arrays))]


def fd_spatial_grads(params: NetworkParams, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Fourth-order central differences of f with respect to the input coordinates."""
    from cnm.field import evaluate_batched

    cols = []
    for e in np.eye(x.shape[1]):
        f = [evaluate_batched(params, x + k * h * e) for k in (2, 1, -1, -2)]
        cols.append((8 * (f[1] - f[2]) - (f[0] - f[3])) / (12 * h))
    return np.stack(cols, axis=1)
