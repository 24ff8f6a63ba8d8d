import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (x is not modified)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def np_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def np_log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def reference_loss(images, encoder, head, patch, labels, teacher_logits=None, codewords=None,
                   anchor=None, alpha=2.0, beta=0.1, temperature=10.0):
    """Plain-numpy student objective, written independently of the package.

    ``encoder`` is a list of (W, b) arrays and ``head`` a (W, b) pair.  With
    ``codewords`` the features are replaced by brute-force nearest codewords.
    With ``anchor=(z0, zq0)`` the quantized grid is ``z - z0 + zq0``: the
    straight-through surrogate whose derivative is the delivered gradient, with
    the commitment target frozen at ``zq0``.
    """
    b, side, _ = images.shape
    g = side // patch
    x = images.reshape(b, g, patch, g, patch).transpose(0, 1, 3, 2, 4).reshape(-1, patch * patch)
    for i, (w, bias) in enumerate(encoder):
        x = x @ w.T + bias
        if i < len(encoder) - 1:
            x = np.maximum(x, 0.0)
    z = x.reshape(b, g, g, -1)
    comm = 0.0
    if anchor is not None:
        z0, zq0 = anchor
        zq = z - z0 + zq0
        comm = float(((z - zq0) ** 2).mean())
    elif codewords is not None:
        flat = z.reshape(-1, z.shape[-1])
        d = ((flat[:, None, :] - codewords[None]) ** 2).sum(-1)
        zq = codewords[d.argmin(axis=1)].reshape(z.shape)
        comm = float(((z - zq) ** 2).mean())
    else:
        zq = z
    logits = zq.mean(axis=(1, 2)) @ head[0].T + head[1]
    cla = float(-np_log_softmax(logits)[np.arange(b), labels].mean())
    con = 0.0
    if teacher_logits is not None:
        ls = np_log_softmax(logits / temperature)
        lt = np_log_softmax(teacher_logits / temperature)
        con = float((np.exp(ls) * (ls - lt)).sum(axis=1).mean())
    return cla + alpha * con + beta * comm, z
