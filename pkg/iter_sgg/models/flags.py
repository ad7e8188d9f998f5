import os
import threading

from contextlib import contextmanager


def get_seed_override():
    """The run seed from ``ITER_SGG_SEED``, or None when unset."""
    value = os.environ.get("ITER_SGG_SEED", "")
    if not value:
        return None
    try:
        return int(value)
    except ValueError:
        raise ValueError(f"ITER_SGG_SEED must be an integer, got {value!r}") from None


state = threading.local()
state.trace = None


@contextmanager
def tracing():
    """Records the conditioned positional encodings of every decoder step.

    Yields a list that receives one dict per step with the positions fed to
    the subject, object and predicate layers.
    """
    records = []
    try:
        old_trace, state.trace = getattr(state, "trace", None), records
        yield records
    finally:
        state.trace = old_trace


def get_trace():
    return getattr(state, "trace", None)
