"""Secure live VM migration simulator: integrity policy, vTPM, I/O
redirection, authenticated data plane and the migration protocol."""

from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
