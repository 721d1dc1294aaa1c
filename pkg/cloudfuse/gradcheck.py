import numpy as np

from .tensor import Tensor, no_grad


def numerical_gradient(fn, arrays, index, eps=1e-6):
    """
    Central finite-difference gradient of the scalar `fn(*arrays)` with respect to
    `arrays[index]`, perturbing one entry at a time.
    """
    target = arrays[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        plus = float(fn(*arrays))
        flat[i] = original - eps
        minus = float(fn(*arrays))
        flat[i] = original
        out[i] = (plus - minus) / (2 * eps)
    return grad


def relative_error(analytic, numeric):
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(build, arrays, eps=1e-6):
    """
    Compare reverse-mode gradients with central differences.

    `build(*tensors)` must return a scalar Tensor. `arrays` are float64 numpy arrays; each
    is wrapped in a Tensor requiring a gradient. Returns the relative error per input.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*tensors).backward()

    def evaluate(*values):
        with no_grad():
            return build(*[Tensor(v) for v in values]).item()

    errors = []
    for i, tensor in enumerate(tensors):
        numeric = numerical_gradient(evaluate, arrays, i, eps=eps)
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(arrays[i])
        errors.append(relative_error(analytic, numeric))
    return errors
