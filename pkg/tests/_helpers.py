"""Independent oracles shared by the test modules."""
import numpy as np

from gmdlearn.model import forward_case, loss_fn


def central_difference(f, x, h=1e-5):
    """Gradient of scalar ``f`` at flat ``x`` by central differences."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        g[i] = (f(up) - f(down)) / (2 * h)
    return g


def rel_error(a, b):
    """Norm-wise relative error, safe when both vectors vanish."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def model_fd_grads(model, inputs, targets, case, loss, h=1e-5):
    """Finite-difference gradient of every parameter group of a DS model."""
    f_loss = loss_fn(loss)
    out = {}
    for gid, flat in model.flat().items():
        def f(v, gid=gid):
            m = model.with_flat({gid: v})
            return f_loss(forward_case(m, inputs, case)[0], targets).item()

        out[gid] = central_difference(f, flat, h)
    return out


def numpy_mlp(x, params, arch):
    """Plain numpy forward pass of an MLP with W{i}, b{i} arrays."""
    acts = {"relu": lambda z: np.maximum(z, 0), "tanh": np.tanh, "identity": lambda z: z}
    for i, (_, a) in enumerate(arch):
        x = acts[a](x @ params[f"W{i}"] + params[f"b{i}"])
    return x
