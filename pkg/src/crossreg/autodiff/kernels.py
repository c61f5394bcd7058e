"""Raw valid-padding 3D convolution kernels.

Two interchangeable backends compute the same three maps: the forward
correlation, its adjoint with respect to the input, and its adjoint with
respect to the kernel.  ``numpy`` is the reference; ``torch`` (used when
importable) only borrows torch's CPU convolution routines as fast kernels,
all graph bookkeeping stays in :mod:`crossreg.autodiff`.

Select with ``CROSSREG_BACKEND=numpy|torch|auto`` or :func:`set_backend`.
``CROSSREG_DETERMINISTIC=1`` pins torch to one intra-op thread.
"""
from __future__ import annotations

import os

import numpy as np

_BACKEND = None


def _out_extent(n: int, k: int, s: int) -> int:
    return (n - k) // s + 1


class NumpyKernels:
    name = "numpy"

    @staticmethod
    def _window(x, a, b, c, out_sp, s):
        D, H, W = out_sp
        return x[:, :, a:a + s * (D - 1) + 1:s, b:b + s * (H - 1) + 1:s, c:c + s * (W - 1) + 1:s]

    def conv3d(self, x, w, stride):
        k = w.shape[2]
        out_sp = tuple(_out_extent(n, k, stride) for n in x.shape[2:])
        out = np.zeros((w.shape[0], x.shape[0]) + out_sp, dtype=x.dtype)
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    xs = self._window(x, a, b, c, out_sp, stride)
                    out += np.tensordot(w[:, :, a, b, c], xs, axes=([1], [1]))
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))

    def conv3d_grad_input(self, g, w, in_shape, stride):
        k = w.shape[2]
        out_sp = g.shape[2:]
        gx = np.zeros(in_shape, dtype=g.dtype)
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    contrib = np.tensordot(w[:, :, a, b, c], g, axes=([0], [1]))
                    self._window(gx, a, b, c, out_sp, stride)[...] += contrib.transpose(1, 0, 2, 3, 4)
        return gx

    def conv3d_grad_weight(self, g, x, w_shape, stride):
        k = w_shape[2]
        out_sp = g.shape[2:]
        gw = np.empty(w_shape, dtype=g.dtype)
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    xs = self._window(x, a, b, c, out_sp, stride)
                    gw[:, :, a, b, c] = np.tensordot(g, xs, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        return gw

    def conv3d_grads(self, g, x, w, stride, need_input=True, need_weight=True, need_bias=False):
        gx = self.conv3d_grad_input(g, w, x.shape, stride) if need_input else None
        gw = self.conv3d_grad_weight(g, x, w.shape, stride) if need_weight else None
        gb = g.sum(axis=(0, 2, 3, 4)) if need_bias else None
        return gx, gw, gb


class TorchKernels:
    name = "torch"

    def __init__(self):
        import torch
        import torch.nn.functional as F

        self.torch = torch
        self.F = F
        if os.environ.get("CROSSREG_DETERMINISTIC", "") not in ("", "0"):
            torch.set_num_threads(1)

    def _t(self, a):
        return self.torch.from_numpy(np.ascontiguousarray(a))

    def conv3d(self, x, w, stride):
        with self.torch.no_grad():
            return self.F.conv3d(self._t(x), self._t(w), stride=stride).numpy()

    def conv3d_grad_input(self, g, w, in_shape, stride):
        with self.torch.no_grad():
            out = self.torch.nn.grad.conv3d_input(tuple(in_shape), self._t(w), self._t(g), stride=stride)
        return out.numpy()

    def conv3d_grad_weight(self, g, x, w_shape, stride):
        with self.torch.no_grad():
            out = self.torch.nn.grad.conv3d_weight(self._t(x), tuple(w_shape), self._t(g), stride=stride)
        return out.numpy()

    def conv3d_grads(self, g, x, w, stride, need_input=True, need_weight=True, need_bias=False):
        """All three adjoints from a single backend call."""
        if not (need_input or need_weight or need_bias):
            return None, None, None
        t = self.torch
        with t.no_grad():
            gx, gw, gb = t.ops.aten.convolution_backward(
                self._t(g), self._t(x), self._t(w), [w.shape[0]] if need_bias else None,
                [stride] * 3, [0] * 3, [1] * 3, False, [0] * 3, 1,
                [need_input, need_weight, need_bias])
        return tuple(None if a is None else a.numpy() for a in (gx, gw, gb))


def _select(name: str):
    if name == "numpy":
        return NumpyKernels()
    if name == "torch":
        return TorchKernels()
    if name == "auto":
        try:
            return TorchKernels()
        except ImportError:
            return NumpyKernels()
    raise ValueError(f"unknown backend {name!r}")


def get_backend():
    global _BACKEND
    if _BACKEND is None:
        _BACKEND = _select(os.environ.get("CROSSREG_BACKEND", "auto"))
    return _BACKEND


def set_backend(name: str):
    """Switch kernels; returns the previous backend name."""
    global _BACKEND
    prev = get_backend().name
    _BACKEND = _select(name)
    return prev
