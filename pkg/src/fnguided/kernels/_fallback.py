"""Pure numpy versions of the compiled kernels.

Each function mirrors the signature of its counterpart in ``_ckernels.pyx``
and is used when the extension is not built.
"""

import numpy as np


def jacobi_eigh_batch(mats, tol=1e-12, max_sweeps=100):
    """Cyclic Jacobi eigendecomposition of a stack of symmetric matrices.

    Rotations are applied to the whole batch at once. Returns eigenvalues in
    ascending order ``(B, n)``, eigenvectors as columns ``(B, n, n)`` and the
    number of sweeps each matrix needed (``-1`` if it did not converge).
    """
    A = np.array(mats, dtype=np.float64, copy=True)
    if A.ndim != 3 or A.shape[1] != A.shape[2]:
        raise ValueError(f"expected (B, n, n), got {A.shape}")
    B, n, _ = A.shape
    V = np.broadcast_to(np.eye(n), (B, n, n)).copy()
    sweeps = np.full(B, -1, dtype=np.int64)
    scale = np.maximum(np.abs(A).max(axis=(1, 2)), 1e-300)
    iu = np.triu_indices(n, 1)
    rows = np.arange(B)
    for sweep in range(max_sweeps):
        off = np.abs(A[:, iu[0], iu[1]]).max(axis=1) if n > 1 else np.zeros(B)
        done = off <= tol * scale
        sweeps[done & (sweeps < 0)] = sweep
        if done.all():
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[:, p, q]
                active = np.abs(apq) > tol * scale * 1e-3
                if not active.any():
                    continue
                app, aqq = A[:, p, p], A[:, q, q]
                safe = np.where(active, apq, 1.0)
                theta = (aqq - app) / (2.0 * safe)
                t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
                t = np.where(theta == 0, 1.0, t)
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J with J the (p, q) rotation
                Ap = A[:, :, p].copy()
                Aq = A[:, :, q].copy()
                A[:, :, p] = c[:, None] * Ap - s[:, None] * Aq
                A[:, :, q] = s[:, None] * Ap + c[:, None] * Aq
                Ap = A[:, p, :].copy()
                Aq = A[:, q, :].copy()
                A[:, p, :] = c[:, None] * Ap - s[:, None] * Aq
                A[:, q, :] = s[:, None] * Ap + c[:, None] * Aq
                A[rows, p, q] = np.where(active, 0.0, A[rows, p, q])
                A[rows, q, p] = A[rows, p, q]
                Vp = V[:, :, p].copy()
                Vq = V[:, :, q].copy()
                V[:, :, p] = c[:, None] * Vp - s[:, None] * Vq
                V[:, :, q] = s[:, None] * Vp + c[:, None] * Vq
    else:
        off = np.abs(A[:, iu[0], iu[1]]).max(axis=1) if n > 1 else np.zeros(B)
        done = off <= tol * scale
        sweeps[done & (sweeps < 0)] = max_sweeps
    evals = np.diagonal(A, axis1=1, axis2=2).copy()
    order = np.argsort(evals, axis=1, kind="stable")
    evals = np.take_along_axis(evals, order, axis=1)
    V = np.take_along_axis(V, order[:, None, :], axis=2)
    return evals, V, sweeps


def symmetric_epipolar_distances(Es, x1, x2):
    """Symmetric epipolar distance of every correspondence under every model.

    ``Es`` is ``(H, 3, 3)``, ``x1``/``x2`` are ``(N, 2)`` normalized points.
    Returns ``(H, N)``; degenerate lines give ``inf``.
    """
    Es = np.asarray(Es, dtype=np.float64)
    X1 = np.column_stack([x1, np.ones(len(x1))])
    X2 = np.column_stack([x2, np.ones(len(x2))])
    Ex1 = np.einsum("hij,nj->hni", Es, X1)
    Etx2 = np.einsum("hji,nj->hni", Es, X2)
    alg = np.einsum("ni,hni->hn", X2, Ex1)
    d1 = Ex1[..., 0] ** 2 + Ex1[..., 1] ** 2
    d2 = Etx2[..., 0] ** 2 + Etx2[..., 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        out = alg * alg * (1.0 / d1 + 1.0 / d2)
    out[(d1 == 0) | (d2 == 0)] = np.inf
    return out


def count_inliers(Es, x1, x2, threshold):
    """Number of correspondences with residual below ``threshold`` per model."""
    res = symmetric_epipolar_distances(Es, x1, x2)
    return (res < threshold).sum(axis=1).astype(np.int64)


def wstd_forward(x, w, eps):
    """Weighted standardization over axis 1 of ``x`` ``(M, N, C)``.

    ``w`` is ``(M, N)`` (rows summing to one) or ``None`` for uniform
    weights. Returns ``y = (x - u) * s``, the centred input ``d`` and
    ``s = (var + eps)^-1/2`` of shape ``(M, C)``.
    """
    if w is None:
        u = x.mean(axis=1)
        d = x - u[:, None, :]
        var = np.einsum("mnc,mnc->mc", d, d) / x.shape[1]
    else:
        u = np.einsum("mn,mnc->mc", w, x)
        d = x - u[:, None, :]
        var = np.einsum("mn,mnc,mnc->mc", w, d, d)
    s = 1.0 / np.sqrt(var + eps)
    return d * s[:, None, :], d, s


def wstd_backward(gy, x, d, s, w, need_w):
    """Gradients of :func:`wstd_forward` w.r.t. ``x`` and (optionally) ``w``."""
    M, N, C = x.shape
    gvar2 = -np.einsum("mnc,mnc->mc", gy, d) * s ** 3  # 2 * dL/dvar
    if w is None:
        gd = gy * s[:, None, :] + d * (gvar2 / N)[:, None, :]
        gu = -gd.sum(axis=1)
        return gd + gu[:, None, :] / N, None
    gd = gy * s[:, None, :] + d * (w[:, :, None] * gvar2[:, None, :])
    gu = -gd.sum(axis=1)
    gx = gd + w[:, :, None] * gu[:, None, :]
    gw = None
    if need_w:
        gw = np.einsum("mc,mnc->mn", gu, x) + 0.5 * np.einsum("mc,mnc,mnc->mn", gvar2, d, d)
    return gx, gw


def block_diag_dense(W):
    """Dense block-diagonal matrix from group blocks ``(groups, cin, cout)``."""
    g, ci, co = W.shape
    D = np.zeros((g, ci, g, co))
    idx = np.arange(g)
    D[idx, :, idx, :] = W
    return D.reshape(g * ci, g * co)


def _diag_blocks(D, shape):
    g, ci, co = shape
    D4 = D.reshape(g, ci, g, co)
    idx = np.arange(g)
    return D4[idx, :, idx, :].copy()


def channel_gate_forward(h, W1, b1, W2, b2):
    """``h * sigmoid(G2 relu(G1 h + b1) + b2)`` for ``h`` of shape ``(M, C)``.

    ``G1``/``G2`` are block-diagonal maps given by their group blocks
    ``(groups, cin, cout)``; they are applied as dense GEMMs, which for a
    handful of groups is faster than looping over the blocks. Returns the
    output, the hidden activations and the gate.
    """
    hidden = h @ block_diag_dense(W1)
    hidden += b1
    np.maximum(hidden, 0.0, out=hidden)
    z = hidden @ block_diag_dense(W2)
    z += b2
    z *= 0.5
    np.tanh(z, out=z)
    z *= 0.5
    z += 0.5
    return h * z, hidden, z


def channel_gate_backward(gout, h, W1, W2, hidden, gate):
    """Gradients ``(gh, gW1, gb1, gW2, gb2)`` of :func:`channel_gate_forward`."""
    gh = gout * gate
    gz2 = gout * h
    gz2 *= gate
    gz2 -= gz2 * gate
    gb2 = gz2.sum(axis=0)
    gW2 = _diag_blocks(hidden.T @ gz2, W2.shape)
    gz1 = gz2 @ block_diag_dense(W2).T
    gz1 *= hidden > 0
    gb1 = gz1.sum(axis=0)
    gW1 = _diag_blocks(h.T @ gz1, W1.shape)
    gh += gz1 @ block_diag_dense(W1).T
    return gh, gW1, gb1, gW2, gb2


def affine_relu_forward(x, gamma, beta):
    """``relu(x * gamma + beta)`` for ``x`` of shape ``(M, C)``."""
    out = x * gamma
    out += beta
    np.maximum(out, 0.0, out=out)
    return out


def affine_relu_backward(g, x, out, gamma):
    """Gradients ``(gx, ggamma, gbeta)`` of :func:`affine_relu_forward`."""
    gz = g * (out > 0)
    ones = np.ones(len(gz))
    gbeta = ones @ gz
    ggamma = ones @ (gz * x)
    gz *= gamma
    return gz, ggamma, gbeta
