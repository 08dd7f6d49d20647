"""Shared test oracles: central finite differences for gradient checks.

The oracle perturbs raw arrays and re-runs the forward pass; it never touches
the engine's backward machinery, so it stays independent of what it checks.
"""

import numpy as np

import skeldiff.autodiff as ad
from skeldiff.autodiff import Value

FD_H = 1e-5
FD_TOL = 1e-4


def finite_diff_grad(f, x, h=FD_H):
    """Central differences of scalar f(x) w.r.t. every coordinate of array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric):
    """Vector-level relative error: ||a - n||_inf / max(||n||_inf, 1e-12)."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = max(float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / denom


def check_gradients(build, arrays, seed=0, tol=FD_TOL):
    """Compare engine gradients of loss = sum(w * build(*arrays)) against the FD oracle.

    Returns the worst relative error across all differentiable inputs.
    """
    rng = np.random.default_rng(seed)
    values = [Value(np.asarray(a, dtype=np.float64).copy(), requires_grad=True) for a in arrays]
    out = build(*values)
    w = rng.normal(size=out.data.shape)
    loss = ad.mul(ad.mean(ad.mul(out, w)), float(out.data.size))  # = sum(w * out)
    ad.backward(loss)

    worst = 0.0
    for idx, val in enumerate(values):
        def scalar_f(perturbed, _idx=idx):
            probe = [v.data if j != _idx else perturbed for j, v in enumerate(values)]
            with ad.no_grad():
                res = build(*[Value(p) for p in probe])
            return float(np.sum(w * res.data))

        numeric = finite_diff_grad(scalar_f, val.data.copy())
        assert val.grad is not None, f"input {idx} received no gradient"
        err = relative_error(val.grad, numeric)
        assert err < tol, f"input {idx}: relative error {err:.3e} >= {tol}"
        worst = max(worst, err)
    return worst


def check_model_gradients(forward_scalar, wrt, h=FD_H, tol=FD_TOL, max_coords=None, seed=0):
    """FD-check analytic gradients of a live model.

    forward_scalar() must recompute the scalar loss from the CURRENT contents
    of every array in `wrt` (dict name -> (array, analytic_grad)); arrays are
    perturbed in place.  Large tensors can be subsampled via max_coords.
    Returns the worst vector-level relative error.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, (arr, analytic) in wrt.items():
        flat = arr.reshape(-1)
        aflat = np.asarray(analytic).reshape(-1)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        else:
            coords = np.arange(flat.size)
        numeric = np.empty(coords.size)
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            fp = forward_scalar()
            flat[i] = orig - h
            fm = forward_scalar()
            flat[i] = orig
            numeric[j] = (fp - fm) / (2.0 * h)
        err = relative_error(aflat[coords], numeric)
        assert err < tol, f"{name}: relative error {err:.3e} >= {tol}"
        worst = max(worst, err)
    return worst


def _random_shape(rng, ndim, lo=1, hi=5):
    return tuple(int(rng.integers(lo, hi + 1)) for _ in range(ndim))


def primitive_fd_cases(seed):
    """One randomized instance of every primitive, as (name, build, arrays) tuples."""
    rng = np.random.default_rng((seed, 0xFD))
    cases = []

    a_shape = _random_shape(rng, int(rng.integers(1, 4)))
    cases.append(("add", lambda a, b: ad.add(a, b),
                  [rng.normal(size=a_shape), rng.normal(size=a_shape)]))
    cases.append(("add_broadcast", lambda a, b: ad.add(a, b),
                  [rng.normal(size=(3, 4)), rng.normal(size=(4,))]))
    cases.append(("mul", lambda a, b: ad.mul(a, b),
                  [rng.normal(size=a_shape), rng.normal(size=a_shape)]))
    cases.append(("mul_broadcast", lambda a, b: ad.mul(a, b),
                  [rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 1))]))

    m, k, n = (int(rng.integers(2, 5)) for _ in range(3))
    cases.append(("matmul", lambda a, b: ad.matmul(a, b),
                  [rng.normal(size=(m, k)), rng.normal(size=(k, n))]))
    cases.append(("matmul_batched", lambda a, b: ad.matmul(a, b),
                  [rng.normal(size=(2, m, k)), rng.normal(size=(2, k, n))]))
    cases.append(("dense", lambda x, w, b: ad.dense(x, w, b),
                  [rng.normal(size=(2, 3, k)), rng.normal(size=(k, n)), rng.normal(size=(n,))]))

    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 3))
    ksz = int(rng.integers(1, 4))
    hw = int(rng.integers(ksz, ksz + 4))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    cases.append((
        f"conv2d_s{stride}p{pad}k{ksz}",
        lambda x, w, b: ad.conv2d(x, w, b, stride=stride, pad=pad),
        [rng.normal(size=(2, hw, hw, cin)), rng.normal(size=(ksz, ksz, cin, cout)),
         rng.normal(size=(cout,))],
    ))
    cases.append(("avg_pool2d", lambda x: ad.avg_pool2d(x, 2),
                  [rng.normal(size=(2, 4, 4, 3))]))
    cases.append(("upsample_nearest2d", lambda x: ad.upsample_nearest2d(x, 2),
                  [rng.normal(size=(2, 3, 3, 2))]))

    d = int(rng.integers(2, 7))
    cases.append(("layer_norm", lambda x, g, b: ad.layer_norm(x, g, b),
                  [rng.normal(size=(3, 4, d)), rng.normal(size=(d,)) + 1.0, rng.normal(size=(d,))]))
    cases.append(("softmax", lambda x: ad.softmax(x), [rng.normal(size=(3, d))]))
    cases.append(("log_softmax", lambda x: ad.log_softmax(x), [rng.normal(size=(3, d))]))
    cases.append(("silu", lambda x: ad.silu(x), [rng.normal(size=(3, 4))]))
    cases.append(("gelu", lambda x: ad.gelu(x), [rng.normal(size=(3, 4))]))

    cases.append(("mean_full", lambda x: ad.mean(x), [rng.normal(size=(3, 4))]))
    cases.append(("mean_axis", lambda x: ad.mean(x, axis=1), [rng.normal(size=(2, 3, 4))]))
    cases.append(("mean_axes", lambda x: ad.mean(x, axis=(0, 2)), [rng.normal(size=(2, 3, 4))]))
    cases.append(("reshape", lambda x: ad.reshape(x, (3, 4)), [rng.normal(size=(2, 6))]))
    cases.append(("transpose", lambda x: ad.transpose(x, (2, 0, 1)), [rng.normal(size=(2, 3, 4))]))
    cases.append(("concat", lambda a, b: ad.concat([a, b], axis=1),
                  [rng.normal(size=(2, 3)), rng.normal(size=(2, 4))]))

    ids = rng.integers(0, 5, size=6)  # repeats exercise scatter-add
    cases.append(("embedding_lookup", lambda t: ad.embedding_lookup(t, ids),
                  [rng.normal(size=(5, 3))]))
    labels = rng.integers(0, 4, size=3)
    cases.append(("take_per_row", lambda x: ad.take_per_row(x, labels),
                  [rng.normal(size=(3, 4))]))

    heads = int(rng.choice([1, 2]))
    dm = heads * int(rng.integers(2, 4))
    cases.append(("multi_head_attention",
                  lambda q, k2, v: ad.multi_head_attention(q, k2, v, heads),
                  [rng.normal(size=(2, 3, dm)) for _ in range(3)]))
    return cases


def run_primitive_fd_suite(instances=20, tol=FD_TOL):
    """Every primitive x `instances` random cases; returns worst error per primitive."""
    worst = {}
    for seed in range(instances):
        for name, build, arrays in primitive_fd_cases(seed):
            err = check_gradients(build, arrays, seed=seed, tol=tol)
            key = name.split("_s")[0] if name.startswith("conv2d") else name
            worst[key] = max(worst.get(key, 0.0), err)
    return worst
