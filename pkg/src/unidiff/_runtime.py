import os

import torch


class NumericalError(RuntimeError):
    """Raised when a forward pass, loss or integration step produces non-finite values."""

    def __init__(self, message: str, *, layer: int | None = None, step: int | None = None):
        super().__init__(message)
        self.layer = layer
        self.step = step


def thread_count() -> int:
    raw = os.environ.get("UNIDIFF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"UNIDIFF_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def configure_threads() -> int:
    n = thread_count()
    torch.set_num_threads(n)
    if n == 1:
        # bit-exact replay is only promised single-threaded
        torch.use_deterministic_algorithms(True)
    return n
