"""Tensor substrate: gradient evaluation, finite-difference verification, parameter IO.

All learnable operations run on torch tensors (CPU). Training uses float32;
gradient verification always runs in float64 because central differences are
unreliable in single precision.
"""

import math
import struct

import torch

CHECKPOINT_MAGIC = b"GNRF"
CHECKPOINT_VERSION = 1

# denominator clamp for relative errors (gradient checks)
REL_EPS = 1e-8


class SubstrateError(Exception):
    pass


class NonFiniteError(SubstrateError):
    """Raised when a function under differentiation returns a non-finite value."""

    def __init__(self, message, coord=None):
        super().__init__(message)
        self.coord = coord


def evaluate_with_gradients(fn, inputs, parameters=None):
    """Evaluate ``fn(*inputs)`` and return its value with exact reverse-mode gradients.

    ``fn`` must return a scalar tensor. Gradients are returned for every entry
    of ``parameters`` (an iterable of (name, tensor) pairs or a dict) and for
    every input with requires_grad set.
    """
    if parameters is None:
        parameters = {}
    if isinstance(parameters, dict):
        named = list(parameters.items())
    else:
        named = [(n, p) for n, p in parameters]

    out = fn(*inputs)
    if not torch.is_tensor(out) or out.numel() != 1:
        raise SubstrateError(f"loss must be a scalar tensor, got shape {tuple(out.shape)}")
    leaves = [p for _, p in named] + [x for x in inputs if torch.is_tensor(x) and x.requires_grad]
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    param_grads = {}
    for (name, p), g in zip(named, grads[: len(named)]):
        param_grads[name] = torch.zeros_like(p) if g is None else g
    input_grads = []
    for x, g in zip([x for x in inputs if torch.is_tensor(x) and x.requires_grad], grads[len(named):]):
        input_grads.append(torch.zeros_like(x) if g is None else g)
    return out.detach(), param_grads, input_grads


def finite_difference_gradient(f, x, h=1e-5):
    """Central-difference gradient of a scalar function at ``x``, coordinate by coordinate."""
    if h <= 0:
        raise SubstrateError("step size h must be positive")
    x = x.detach()
    flat = x.reshape(-1)
    grad = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(f(x.reshape(x.shape)))
        flat[i] = orig - h
        fm = float(f(x.reshape(x.shape)))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"non-finite value at coordinate {i}", coord=i)
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def finite_difference_at(f, x, coords, h=1e-5):
    """Central differences restricted to the given flat coordinate indices."""
    x = x.detach()
    flat = x.reshape(-1)
    out = []
    for i in coords:
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(f(x.reshape(x.shape)))
        flat[i] = orig - h
        fm = float(f(x.reshape(x.shape)))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"non-finite value at coordinate {i}", coord=i)
        out.append((fp - fm) / (2.0 * h))
    return torch.tensor(out, dtype=x.dtype)


def finite_difference_consistent(f, x, coords, h=1e-5, rel_tol=0.01):
    """Central differences with smoothness filters.

    The composed pipeline is piecewise smooth (binary warp validity, bilinear
    cell crossings, ReLU kinks), and FD only estimates a derivative inside a
    smooth piece. A coordinate is kept when (a) the h and h/2 central estimates
    agree (Richardson test, rejects jumps and off-center kinks) and (b) the
    forward and backward one-sided slopes agree (rejects kinks straddling the
    evaluation point). Returns (fd estimates at h/2, consistent mask).
    """
    x = x.detach()
    flat = x.reshape(-1)
    f0 = float(f(x.reshape(x.shape)))
    fd_h2, fwd, bwd = [], [], []
    for i in coords:
        orig = flat[i].item()
        samples = {}
        for d in (h, h / 2, -h / 2, -h):
            flat[i] = orig + d
            samples[d] = float(f(x.reshape(x.shape)))
        flat[i] = orig
        if not all(math.isfinite(v) for v in samples.values()):
            raise NonFiniteError(f"non-finite value at coordinate {i}", coord=i)
        fd_h2.append((samples[h / 2] - samples[-h / 2]) / h)
        fwd.append((samples[h] - f0) / h)
        bwd.append((f0 - samples[-h]) / h)
    fd_h2 = torch.tensor(fd_h2, dtype=torch.float64)
    fwd = torch.tensor(fwd, dtype=torch.float64)
    bwd = torch.tensor(bwd, dtype=torch.float64)
    fd_h = (fwd + bwd) / 2
    scale = torch.maximum(torch.maximum(fd_h.abs(), fd_h2.abs()),
                          torch.full_like(fd_h, 1e-6))
    consistent = ((fd_h - fd_h2).abs() <= rel_tol * scale) \
        & ((fwd - bwd).abs() <= rel_tol * scale)
    return fd_h2, consistent


def max_relative_error(a, b, eps=REL_EPS, atol=1e-9):
    """Max of |a-b| / max(|a|,|b|,eps); differences below ``atol`` count as exact
    (central differences cannot resolve gradients below their round-off floor)."""
    a = a.reshape(-1).double()
    b = b.reshape(-1).double()
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, eps))
    err = (a - b).abs()
    err = torch.where(err <= atol, torch.zeros_like(err), err)
    return (err / denom).max().item()


def gradcheck_scalar_fn(f, x, h=1e-5, n_coords=None, generator=None):
    """Compare reverse-mode gradients of ``f`` against central differences.

    Returns the max relative error over all (or ``n_coords`` sampled)
    coordinates of ``x``. ``f`` must accept a tensor and return a scalar tensor.
    """
    x = x.detach().clone().requires_grad_(True)
    out = f(x)
    (analytic,) = torch.autograd.grad(out, x)
    total = x.numel()
    if n_coords is None or n_coords >= total:
        coords = list(range(total))
    else:
        perm = torch.randperm(total, generator=generator)
        coords = perm[:n_coords].tolist()
    fd = finite_difference_at(lambda t: f(t), x, coords, h=h)
    return max_relative_error(analytic.reshape(-1)[coords], fd)


def gradcheck_parameters(loss_fn, module, h=1e-5, coords_per_param=8, generator=None):
    """Finite-difference check of ``loss_fn()`` against autograd for every parameter of ``module``.

    ``loss_fn`` closes over the module and must be a pure function of its
    parameters. Returns {param_name: max_rel_err}.
    """
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    report = {}
    for (name, p), g in zip(params, grads):
        analytic = torch.zeros_like(p) if g is None else g
        total = p.numel()
        if coords_per_param >= total:
            coords = list(range(total))
        else:
            perm = torch.randperm(total, generator=generator)
            coords = perm[:coords_per_param].tolist()
        flat = p.data.reshape(-1)
        fd = []
        for i in coords:
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(loss_fn().detach())
            flat[i] = orig - h
            fm = float(loss_fn().detach())
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"non-finite loss while perturbing {name}[{i}]", coord=i)
            fd.append((fp - fm) / (2.0 * h))
        fd = torch.tensor(fd, dtype=p.dtype)
        report[name] = max_relative_error(analytic.reshape(-1)[coords], fd)
    return report


def gradcheck_parameters_filtered(loss_fn, module, h=1e-5, coords_per_param=3,
                                  generator=None, rel_tol=0.01):
    """Like :func:`gradcheck_parameters` but drops coordinates where the loss is
    not locally smooth (see :func:`finite_difference_consistent`).

    Returns ({param_name: max_rel_err over kept coords}, kept, skipped).
    """
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    report = {}
    kept = skipped = 0
    for (name, p), g in zip(params, grads):
        analytic = torch.zeros_like(p) if g is None else g
        total = p.numel()
        if coords_per_param >= total:
            coords = list(range(total))
        else:
            perm = torch.randperm(total, generator=generator)
            coords = perm[:coords_per_param].tolist()
        flat = p.data.reshape(-1)
        errs = []
        f0 = float(loss_fn().detach())
        for i in coords:
            orig = flat[i].item()
            vals = {}
            for d in (h, h / 2, -h / 2, -h):
                flat[i] = orig + d
                vals[d] = float(loss_fn().detach())
            flat[i] = orig
            fd_h = (vals[h] - vals[-h]) / (2 * h)
            fd_h2 = (vals[h / 2] - vals[-h / 2]) / h
            fwd = (vals[h] - f0) / h
            bwd = (f0 - vals[-h]) / h
            scale = max(abs(fd_h), abs(fd_h2), 1e-6)
            if abs(fd_h - fd_h2) > rel_tol * scale or abs(fwd - bwd) > rel_tol * scale:
                skipped += 1
                continue
            kept += 1
            errs.append(max_relative_error(analytic.reshape(-1)[i:i + 1],
                                           torch.tensor([fd_h2], dtype=torch.float64)))
        report[name] = max(errs) if errs else 0.0
    return report, kept, skipped


def init_parameters(module, generator=None):
    """Uniform +-1/sqrt(fan_in) init for conv/linear weights, zero biases, identity norms."""
    for m in module.modules():
        if isinstance(m, (torch.nn.Linear, torch.nn.Conv1d, torch.nn.Conv2d, torch.nn.Conv3d,
                          torch.nn.ConvTranspose1d, torch.nn.ConvTranspose2d, torch.nn.ConvTranspose3d)):
            w = m.weight
            if isinstance(m, (torch.nn.ConvTranspose1d, torch.nn.ConvTranspose2d, torch.nn.ConvTranspose3d)):
                fan_in = w.shape[0] * math.prod(w.shape[2:])
            elif isinstance(m, torch.nn.Linear):
                fan_in = w.shape[1]
            else:
                fan_in = w.shape[1] * math.prod(w.shape[2:])
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                w.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (torch.nn.BatchNorm1d, torch.nn.BatchNorm2d, torch.nn.BatchNorm3d,
                            torch.nn.LayerNorm)):
            with torch.no_grad():
                if m.weight is not None:
                    m.weight.fill_(1.0)
                if m.bias is not None:
                    m.bias.zero_()


def save_checkpoint(path, state):
    """Write named tensors as a little-endian binary checkpoint.

    Layout: magic "GNRF", version u32, count u32, then per tensor
    (name length u32, UTF-8 name, rank u32, dims u32 x rank, float32 payload).
    Entries are written in sorted name order. All payloads are stored float32.
    """
    names = sorted(state.keys())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(names)))
        for name in names:
            t = state[name].detach().to(torch.float32).contiguous()
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            dims = list(t.shape)
            fh.write(struct.pack("<I", len(dims)))
            if dims:
                fh.write(struct.pack(f"<{len(dims)}I", *dims))
            fh.write(t.numpy().astype("<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`. Returns {name: float32 tensor}."""
    import numpy as np

    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise SubstrateError(f"bad checkpoint magic {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise SubstrateError(f"unsupported checkpoint version {version}")
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n = 1
            for d in dims:
                n *= d
            payload = np.frombuffer(fh.read(4 * n), dtype="<f4").copy()
            state[name] = torch.from_numpy(payload).reshape(dims)
    return state
